//! Ingredient attention: `n` queries derived from the ingredient representation
//! attend over the encoded instruction words and reduce `p` positions to `n`.
//!
//! ```text
//! K = inst · W_k            (p × h)
//! V = inst · W_v            (p × w)
//! Q[j] = ing · W_q[j]       (h)
//! A[j] = softmax_p(K · Q[j] / sqrt(h))   over unmasked positions
//! out[j] = Σ_i A[j][i] · V[i]
//! ```

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::{lookup, ShapeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct IngredientAttentionParams {
    /// `w × h`
    pub w_k: ParamId,
    /// `w × w`
    pub w_v: ParamId,
    /// `q × (n·h)`: column block `j` is the `q × h` query map `W_q[j]`.
    pub w_q: ParamId,
    pub queries: usize,
    pub h: usize,
}

impl IngredientAttentionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        shape: &ShapeConfig,
        queries: usize,
        rng: &mut R,
    ) -> Self {
        let (w, h, q) = (shape.w, shape.h, shape.q);
        let w_k = store.insert(
            format!("{prefix}.w_k"),
            ParamGroup::Text,
            Matrix::xavier(w, h, rng),
        );
        let w_v = store.insert(
            format!("{prefix}.w_v"),
            ParamGroup::Text,
            Matrix::xavier(w, w, rng),
        );
        let w_q = store.insert(
            format!("{prefix}.w_q"),
            ParamGroup::Text,
            Matrix::xavier(q, queries * h, rng),
        );
        Self {
            w_k,
            w_v,
            w_q,
            queries,
            h,
        }
    }

    /// Installs explicit matrices; `w_q` holds one `q × h` block per query.
    pub fn from_matrices<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        w_k: Matrix<T>,
        w_v: Matrix<T>,
        w_q: &[Matrix<T>],
    ) -> Result<Self> {
        let (w, h) = w_k.shape();
        if w_v.shape() != (w, w) {
            return Err(Error::Shape(format!(
                "W_v must be {w}x{w}, got {:?}",
                w_v.shape()
            )));
        }
        let q = w_q.first().map(|m| m.rows()).unwrap_or(0);
        if w_q.is_empty() || w_q.iter().any(|m| m.shape() != (q, h)) {
            return Err(Error::Shape(format!("every W_q block must be q x {h}")));
        }
        let n = w_q.len();
        let mut packed = Matrix::zeros(q, n * h);
        for (j, block) in w_q.iter().enumerate() {
            for r in 0..q {
                packed.row_mut(r)[j * h..(j + 1) * h].copy_from_slice(block.row(r));
            }
        }
        Ok(Self {
            w_k: store.insert(format!("{prefix}.w_k"), ParamGroup::Text, w_k),
            w_v: store.insert(format!("{prefix}.w_v"), ParamGroup::Text, w_v),
            w_q: store.insert(format!("{prefix}.w_q"), ParamGroup::Text, packed),
            queries: n,
            h,
        })
    }

    pub fn lookup<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        shape: &ShapeConfig,
        queries: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_k: lookup(store, &format!("{prefix}.w_k"))?,
            w_v: lookup(store, &format!("{prefix}.w_v"))?,
            w_q: lookup(store, &format!("{prefix}.w_q"))?,
            queries,
            h: shape.h,
        })
    }
}

/// Returns `(out: n × w, weights: n × p)`.
pub fn ingredient_attention_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    inst: Var,
    mask: &[bool],
    ing: Var,
    params: &IngredientAttentionParams,
) -> Result<(Var, Var)> {
    let (p, w) = g.shape(inst);
    let store = g.store();
    let (wk, wv, wq) = (
        store.value(params.w_k),
        store.value(params.w_v),
        store.value(params.w_q),
    );
    if mask.len() != p {
        return Err(Error::Shape(format!(
            "mask length {} for {p} positions",
            mask.len()
        )));
    }
    if wk.rows() != w || wv.shape() != (w, w) {
        return Err(Error::Shape(format!(
            "instruction width {w} does not match W_k/W_v"
        )));
    }
    let (ing_rows, q) = g.shape(ing);
    if ing_rows != 1 || wq.rows() != q || wq.cols() != params.queries * params.h {
        return Err(Error::Shape(format!(
            "ingredient vector 1x{q} does not match W_q {:?}",
            wq.shape()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    let (k_w, v_w, q_w) = (
        g.param(params.w_k),
        g.param(params.w_v),
        g.param(params.w_q),
    );
    let keys = g.matmul(inst, k_w);
    let values = g.matmul(inst, v_w);
    let queries = g.matmul(ing, q_w);
    let queries = g.reshape(queries, params.queries, params.h);
    let scores = g.matmul_t(queries, keys);
    let scores = g.scale(scores, T::one() / T::lit(params.h as f64).sqrt());
    let weights = g.softmax_rows(scores, Some(mask));
    let out = g.matmul(weights, values);
    Ok((out, weights))
}

/// Stand-alone ingredient attention. Returns `(out: n × w, weights: n × p)`.
pub fn ingredient_attention<T: Scalar>(
    inst: &Matrix<T>,
    mask: &[bool],
    ing: &[T],
    store: &ParamStore<T>,
    params: &IngredientAttentionParams,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut g = Graph::inference(store);
    let iv = g.input(inst.clone());
    let qv = g.input(Matrix::row_vector(ing.to_vec()));
    let (out, weights) = ingredient_attention_graph(&mut g, iv, mask, qv, params)?;
    Ok((g.value(out).clone(), g.value(weights).clone()))
}
