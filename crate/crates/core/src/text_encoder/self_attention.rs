//! Post-norm transformer encoder over instruction positions.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::{lookup, ShapeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attention: AttentionProjections,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
    pub heads: usize,
}

const LAYER_NAMES: [&str; 16] = [
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln1.gamma",
    "ln1.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln2.gamma",
    "ln2.beta",
];

impl EncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        shape: &ShapeConfig,
        rng: &mut R,
    ) -> Self {
        let (w, f) = (shape.w, shape.ffn_dim);
        for l in 0..shape.layers {
            let mut put = |name: &str, m: Matrix<T>| {
                store.insert(format!("{prefix}.{l}.{name}"), ParamGroup::Text, m);
            };
            for proj in ["q", "k", "v", "o"] {
                put(&format!("attn.w_{proj}"), Matrix::xavier(w, w, rng));
                put(&format!("attn.b_{proj}"), Matrix::zeros(1, w));
            }
            put("ln1.gamma", Matrix::filled(1, w, T::one()));
            put("ln1.beta", Matrix::zeros(1, w));
            put("ffn.w1", Matrix::xavier(w, f, rng));
            put("ffn.b1", Matrix::zeros(1, f));
            put("ffn.w2", Matrix::xavier(f, w, rng));
            put("ffn.b2", Matrix::zeros(1, w));
            put("ln2.gamma", Matrix::filled(1, w, T::one()));
            put("ln2.beta", Matrix::zeros(1, w));
        }
        Self::lookup(store, prefix, shape).expect("parameters just inserted")
    }

    pub fn lookup<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        shape: &ShapeConfig,
    ) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|l| {
                let ids: Vec<ParamId> = LAYER_NAMES
                    .iter()
                    .map(|n| lookup(store, &format!("{prefix}.{l}.{n}")))
                    .collect::<Result<_>>()?;
                Ok(EncoderLayerParams {
                    attention: AttentionProjections {
                        w_q: ids[0],
                        b_q: ids[1],
                        w_k: ids[2],
                        b_k: ids[3],
                        w_v: ids[4],
                        b_v: ids[5],
                        w_o: ids[6],
                        b_o: ids[7],
                    },
                    ln1_gamma: ids[8],
                    ln1_beta: ids[9],
                    ffn_w1: ids[10],
                    ffn_b1: ids[11],
                    ffn_w2: ids[12],
                    ffn_b2: ids[13],
                    ln2_gamma: ids[14],
                    ln2_beta: ids[15],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            heads: shape.heads,
        })
    }
}

fn affine<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let (wv, bv) = (g.param(w), g.param(b));
    let y = g.matmul(x, wv);
    g.add_row(y, bv)
}

/// Multi-head scaled dot-product self-attention. Returns the projected output
/// and one `p × p` weight matrix per head.
pub fn multi_head_attention_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    key_mask: &[bool],
    proj: &AttentionProjections,
    heads: usize,
) -> (Var, Vec<Var>) {
    let w = g.shape(x).1;
    let dh = w / heads;
    let q = affine(g, x, proj.w_q, proj.b_q);
    let k = affine(g, x, proj.w_k, proj.b_k);
    let v = affine(g, x, proj.w_v, proj.b_v);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dh, dh);
        let kh = g.slice_cols(k, hd * dh, dh);
        let vh = g.slice_cols(v, hd * dh, dh);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores, Some(key_mask));
        outs.push(g.matmul(a, vh));
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    (affine(g, cat, proj.w_o, proj.b_o), weights)
}

/// Encoder stack inside a graph. Masked rows are zeroed after every layer, so
/// padding positions neither send nor carry information.
pub fn encoder_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: &[bool],
    params: &EncoderParams,
) -> Result<(Var, Vec<Var>)> {
    let (p, w) = g.shape(x);
    if mask.len() != p {
        return Err(Error::Shape(format!(
            "mask length {} for {p} positions",
            mask.len()
        )));
    }
    if params.heads == 0 || w % params.heads != 0 {
        return Err(Error::Shape(format!(
            "width {w} not divisible by {} heads",
            params.heads
        )));
    }
    if let Some(first) = params.layers.first() {
        let expected = g.store().value(first.attention.w_q).rows();
        if expected != w {
            return Err(Error::Shape(format!(
                "input width {w}, encoder expects {expected}"
            )));
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    let mut h = g.mask_rows(x, mask);
    let mut all_weights = Vec::new();
    for layer in &params.layers {
        let (attn, weights) =
            multi_head_attention_graph(g, h, mask, &layer.attention, params.heads);
        all_weights.extend(weights);
        let res = g.add(h, attn);
        let (g1, b1) = (g.param(layer.ln1_gamma), g.param(layer.ln1_beta));
        let h1 = g.layer_norm(res, g1, b1);
        let f = affine(g, h1, layer.ffn_w1, layer.ffn_b1);
        let f = g.relu(f);
        let f = affine(g, f, layer.ffn_w2, layer.ffn_b2);
        let res2 = g.add(h1, f);
        let (g2, b2) = (g.param(layer.ln2_gamma), g.param(layer.ln2_beta));
        let h2 = g.layer_norm(res2, g2, b2);
        h = g.mask_rows(h2, mask);
    }
    Ok((h, all_weights))
}

/// Stand-alone encoder forward pass. Returns the `p × w` output and the
/// attention weights (layer-major, one `p × p` matrix per head).
pub fn self_attention_encode<T: Scalar>(
    x: &Matrix<T>,
    mask: &[bool],
    store: &ParamStore<T>,
    params: &EncoderParams,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let mut g = Graph::inference(store);
    let xv = g.input(x.clone());
    let (out, weights) = encoder_graph(&mut g, xv, mask, params)?;
    Ok((
        g.value(out).clone(),
        weights.into_iter().map(|w| g.value(w).clone()).collect(),
    ))
}
