use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::ops::{gelu, layer_norm, NormCache};
use super::{HeadType, Transformer};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Activations of one block kept for the backward pass. Matrices have one
/// row per token (`batch * len` rows, batch-major).
pub struct LayerCache {
    pub(super) ln1: NormCache,
    pub(super) a: Array2<f64>,
    pub(super) q: Array2<f64>,
    pub(super) k: Array2<f64>,
    pub(super) v: Array2<f64>,
    /// Post-softmax attention, one `len × len` matrix per (batch row, head).
    pub probs: Vec<Array2<f64>>,
    pub(super) ctx: Array2<f64>,
    pub(super) ln2: NormCache,
    pub(super) c: Array2<f64>,
    pub(super) u: Array2<f64>,
    pub(super) gu: Array2<f64>,
}

/// Encoder output before any head.
pub struct Encoded {
    pub batch: usize,
    pub len: usize,
    pub(super) ids: Array2<TokenId>,
    pub layers: Vec<LayerCache>,
    pub(super) lnf: NormCache,
    /// Final layer-normed states, `batch * len × hidden`.
    pub hidden: Array2<f64>,
}

pub struct ForwardOutput {
    /// `batch × len × 1` for the binary head, `batch × len × V` for LM.
    pub logits: Array3<f64>,
    pub encoded: Encoded,
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &ndarray::Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

impl Transformer {
    pub fn encode(&self, ids: ArrayView2<TokenId>, mask: ArrayView2<bool>) -> Result<Encoded> {
        let cfg = &self.config;
        let p = &self.params;
        let (bsz, len) = ids.dim();
        if mask.dim() != ids.dim() {
            return Err(Error::Shape("attention mask does not match ids".into()));
        }
        if len > cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {len} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                limit: cfg.vocab_size,
            });
        }
        let h = cfg.hidden;
        let nh = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = bsz * len;

        let mut x = Array2::<f64>::zeros((n, h));
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            let (b, l) = (r / len, r % len);
            row.assign(&p.tok_emb.row(ids[[b, l]] as usize));
            row += &p.pos_emb.row(l);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &p.layers {
            let (a, ln1) = layer_norm(x.view(), lp.ln1_g.view(), lp.ln1_b.view());
            let q = affine(a.view(), &lp.wq, &lp.bq);
            let k = affine(a.view(), &lp.wk, &lp.bk);
            let v = affine(a.view(), &lp.wv, &lp.bv);

            let blocks: Vec<(Array2<f64>, Array2<f64>)> = (0..bsz * nh)
                .into_par_iter()
                .map(|bh| {
                    let (b, hd) = (bh / nh, bh % nh);
                    let rows = s![b * len..(b + 1) * len, hd * dh..(hd + 1) * dh];
                    let mut scores = q.slice(rows).dot(&k.slice(rows).t());
                    let keys = mask.row(b);
                    for mut srow in scores.rows_mut() {
                        let mut mx = f64::NEG_INFINITY;
                        for (s, &keep) in srow.iter_mut().zip(keys.iter()) {
                            if keep {
                                *s *= scale;
                                mx = mx.max(*s);
                            }
                        }
                        let mut z = 0.0;
                        for (s, &keep) in srow.iter_mut().zip(keys.iter()) {
                            *s = if keep { (*s - mx).exp() } else { 0.0 };
                            z += *s;
                        }
                        if z > 0.0 {
                            srow.mapv_inplace(|e| e / z);
                        }
                    }
                    let ctx = scores.dot(&v.slice(rows));
                    (scores, ctx)
                })
                .collect();
            let mut ctx = Array2::<f64>::zeros((n, h));
            let mut probs = Vec::with_capacity(blocks.len());
            for (bh, (pm, cb)) in blocks.into_iter().enumerate() {
                let (b, hd) = (bh / nh, bh % nh);
                ctx.slice_mut(s![b * len..(b + 1) * len, hd * dh..(hd + 1) * dh])
                    .assign(&cb);
                probs.push(pm);
            }

            x += &affine(ctx.view(), &lp.wo, &lp.bo);
            let (c, ln2) = layer_norm(x.view(), lp.ln2_g.view(), lp.ln2_b.view());
            let u = affine(c.view(), &lp.w1, &lp.b1);
            let gu = u.mapv(gelu);
            x += &affine(gu.view(), &lp.w2, &lp.b2);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                c,
                u,
                gu,
            });
        }
        let (hidden, lnf) = layer_norm(x.view(), p.lnf_g.view(), p.lnf_b.view());
        Ok(Encoded {
            batch: bsz,
            len,
            ids: ids.to_owned(),
            layers,
            lnf,
            hidden,
        })
    }

    /// Head outputs for the given token rows of `hidden`: one column for the
    /// binary head, `V` columns for the LM head.
    pub fn head_logits(&self, hidden: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
        let p = &self.params;
        let sel = hidden.select(Axis(0), rows);
        match self.config.head_type {
            HeadType::Binary => (sel.dot(&p.w_bin) + p.b_bin[0]).insert_axis(Axis(1)),
            HeadType::Lm => sel.dot(&p.tok_emb.t()) + &p.lm_b,
        }
    }

    pub fn forward(&self, ids: ArrayView2<TokenId>, mask: ArrayView2<bool>) -> Result<ForwardOutput> {
        let encoded = self.encode(ids, mask)?;
        let all: Vec<usize> = (0..encoded.batch * encoded.len).collect();
        let flat = self.head_logits(encoded.hidden.view(), &all);
        let out = flat.ncols();
        let logits = flat
            .into_shape_with_order((encoded.batch, encoded.len, out))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ForwardOutput { logits, encoded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransformerParams};
    use ndarray::array;

    fn tiny(head: HeadType) -> Transformer {
        Transformer::new(ModelConfig::desk(20, 8, head), 3).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = ModelConfig::desk(20, 8, HeadType::Binary);
        let m = Transformer::from_params(cfg.clone(), TransformerParams::zeros(&cfg)).unwrap();
        let ids = array![[2u32, 7, 9, 3]];
        let out = m.forward(ids.view(), Array2::from_elem((1, 4), true).view()).unwrap();
        assert!(out.logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn pad_tail_content_is_invisible() {
        let m = tiny(HeadType::Lm);
        let mask = array![[true, true, true, false, false]];
        let a = m.forward(array![[2u32, 8, 3, 0, 0]].view(), mask.view()).unwrap();
        let b = m.forward(array![[2u32, 8, 3, 11, 17]].view(), mask.view()).unwrap();
        assert_eq!(a.logits.slice(s![.., ..3, ..]), b.logits.slice(s![.., ..3, ..]));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = tiny(HeadType::Binary);
        let mask = array![[true, true, true, false], [true, true, true, true]];
        let enc = m
            .encode(array![[2u32, 8, 3, 0], [2, 5, 6, 3]].view(), mask.view())
            .unwrap();
        for (bh, p) in enc.layers[0].probs.iter().enumerate() {
            let b = bh / m.config.heads;
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                for (j, &w) in row.iter().enumerate() {
                    if !mask[[b, j]] {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn too_long_input_is_rejected() {
        let m = tiny(HeadType::Binary);
        let ids = Array2::from_elem((1, 9), 5u32);
        assert!(m.forward(ids.view(), Array2::from_elem((1, 9), true).view()).is_err());
        let ids = Array2::from_elem((1, 3), 20u32);
        assert!(m.forward(ids.view(), Array2::from_elem((1, 3), true).view()).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = tiny(HeadType::Lm);
        let ids = array![[2u32, 8, 9, 10, 3]];
        let mask = Array2::from_elem((1, 5), true);
        let a = m.forward(ids.view(), mask.view()).unwrap().logits;
        let b = m.forward(ids.view(), mask.view()).unwrap().logits;
        assert_eq!(a, b);
    }
}
