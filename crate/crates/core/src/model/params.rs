use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// `hidden × intermediate`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `intermediate × hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All weights of one encoder. Both heads are always allocated; the one not
/// selected by the config simply receives zero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_bin: Array1<f64>,
    pub b_bin: Array1<f64>,
    /// LM output bias; the LM weights are `tok_emb`.
    pub lm_b: Array1<f64>,
}

/// One named parameter tensor as a flat slice.
pub struct Tensor<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    /// Whether weight decay applies (not for biases or layer-norm parameters).
    pub decay: bool,
}

macro_rules! flat {
    ($a:expr) => {
        $a.as_slice_mut().expect("parameters are contiguous")
    };
}

impl LayerParams {
    fn filled(h: usize, i: usize, mut w: impl FnMut(usize, usize) -> Array2<f64>) -> Self {
        Self {
            ln1_g: Array1::ones(h),
            ln1_b: Array1::zeros(h),
            wq: w(h, h),
            bq: Array1::zeros(h),
            wk: w(h, h),
            bk: Array1::zeros(h),
            wv: w(h, h),
            bv: Array1::zeros(h),
            wo: w(h, h),
            bo: Array1::zeros(h),
            ln2_g: Array1::ones(h),
            ln2_b: Array1::zeros(h),
            w1: w(h, i),
            b1: Array1::zeros(i),
            w2: w(i, h),
            b2: Array1::zeros(h),
        }
    }
}

impl TransformerParams {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::label::INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut w = |rows: usize, cols: usize| Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut r));
        let tok_emb = w(cfg.vocab_size, cfg.hidden);
        let pos_emb = w(cfg.max_len, cfg.hidden);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::filled(cfg.hidden, cfg.intermediate, &mut w))
            .collect();
        let w_bin = w(1, cfg.hidden).into_shape_with_order(cfg.hidden).expect("row");
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(cfg.hidden),
            lnf_b: Array1::zeros(cfg.hidden),
            w_bin,
            b_bin: Array1::zeros(1),
            lm_b: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Same shapes as `cfg`, every entry zero (gains included).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let z = |r: usize, c: usize| Array2::zeros((r, c));
        let mut layer = LayerParams::filled(h, cfg.intermediate, z);
        layer.ln1_g.fill(0.0);
        layer.ln2_g.fill(0.0);
        Self {
            tok_emb: z(cfg.vocab_size, h),
            pos_emb: z(cfg.max_len, h),
            layers: vec![layer; cfg.layers],
            lnf_g: Array1::zeros(h),
            lnf_b: Array1::zeros(h),
            w_bin: Array1::zeros(h),
            b_bin: Array1::zeros(1),
            lm_b: Array1::zeros(cfg.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn tensors_mut(&mut self) -> Vec<Tensor<'_>> {
        let mut out = Vec::with_capacity(8 + 16 * self.layers.len());
        macro_rules! push {
            ($name:expr, $data:expr, $decay:expr) => {
                out.push(Tensor {
                    name: $name,
                    data: $data,
                    decay: $decay,
                })
            };
        }
        // Embedding rows hold weights; decay applies.
        push!("tok_emb".into(), flat!(self.tok_emb), true);
        push!("pos_emb".into(), flat!(self.pos_emb), true);
        for (l, p) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            push!(n("ln1_g"), flat!(p.ln1_g), false);
            push!(n("ln1_b"), flat!(p.ln1_b), false);
            push!(n("wq"), flat!(p.wq), true);
            push!(n("bq"), flat!(p.bq), false);
            push!(n("wk"), flat!(p.wk), true);
            push!(n("bk"), flat!(p.bk), false);
            push!(n("wv"), flat!(p.wv), true);
            push!(n("bv"), flat!(p.bv), false);
            push!(n("wo"), flat!(p.wo), true);
            push!(n("bo"), flat!(p.bo), false);
            push!(n("ln2_g"), flat!(p.ln2_g), false);
            push!(n("ln2_b"), flat!(p.ln2_b), false);
            push!(n("w1"), flat!(p.w1), true);
            push!(n("b1"), flat!(p.b1), false);
            push!(n("w2"), flat!(p.w2), true);
            push!(n("b2"), flat!(p.b2), false);
        }
        push!("lnf_g".into(), flat!(self.lnf_g), false);
        push!("lnf_b".into(), flat!(self.lnf_b), false);
        push!("w_bin".into(), flat!(self.w_bin), true);
        push!("b_bin".into(), flat!(self.b_bin), false);
        push!("lm_b".into(), flat!(self.lm_b), false);
        out
    }

    pub fn num_scalars(&mut self) -> usize {
        self.tensors_mut().iter().map(|t| t.data.len()).sum()
    }

    /// Flat copy in `tensors_mut` order.
    pub fn to_flat(&mut self) -> Vec<f64> {
        self.tensors_mut().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn global_norm(&mut self) -> f64 {
        self.tensors_mut()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&mut self) -> Option<String> {
        self.tensors_mut()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let dims = |p: &TransformerParams| -> Vec<Vec<usize>> {
            let mut v = vec![
                p.tok_emb.shape().to_vec(),
                p.pos_emb.shape().to_vec(),
                p.lnf_g.shape().to_vec(),
                p.w_bin.shape().to_vec(),
                p.b_bin.shape().to_vec(),
                p.lm_b.shape().to_vec(),
            ];
            for l in &p.layers {
                v.extend([l.wq.shape(), l.w1.shape(), l.w2.shape(), l.b1.shape()].map(<[usize]>::to_vec));
            }
            v
        };
        if dims(self) != dims(&want) || self.layers.len() != cfg.layers {
            return Err(Error::Shape("parameter shapes do not match the model config".into()));
        }
        Ok(())
    }
}
