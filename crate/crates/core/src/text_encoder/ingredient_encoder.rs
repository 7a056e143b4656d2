//! Bidirectional LSTM over the flattened ingredient tokens.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::lookup;

/// One LSTM direction. Gate column blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `w × 4H`
    pub w_x: ParamId,
    /// `H × 4H`
    pub w_h: ParamId,
    /// `1 × 4H`
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let w_x = store.insert(
            format!("{prefix}.w_x"),
            ParamGroup::Text,
            Matrix::random_uniform(input, 4 * hidden, scale, rng),
        );
        let w_h = store.insert(
            format!("{prefix}.w_h"),
            ParamGroup::Text,
            Matrix::random_uniform(hidden, 4 * hidden, scale, rng),
        );
        let mut bias = Matrix::zeros(1, 4 * hidden);
        // forget gate starts open
        bias.as_mut_slice()[hidden..2 * hidden].fill(T::one());
        let b = store.insert(format!("{prefix}.b"), ParamGroup::Text, bias);
        Self {
            w_x,
            w_h,
            b,
            hidden,
        }
    }

    fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_x: lookup(store, &format!("{prefix}.w_x"))?,
            w_h: lookup(store, &format!("{prefix}.w_h"))?,
            b: lookup(store, &format!("{prefix}.b"))?,
            hidden,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngredientEncoderParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl IngredientEncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        q: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmParams::init(store, &format!("{prefix}.fwd"), input, q / 2, rng),
            backward: LstmParams::init(store, &format!("{prefix}.bwd"), input, q / 2, rng),
        }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str, q: usize) -> Result<Self> {
        Ok(Self {
            forward: LstmParams::lookup(store, &format!("{prefix}.fwd"), q / 2)?,
            backward: LstmParams::lookup(store, &format!("{prefix}.bwd"), q / 2)?,
        })
    }

    pub fn output_len(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }
}

/// Runs one direction over the rows of `xs` and returns the final hidden state.
fn lstm_final_state<T: Scalar>(
    g: &mut Graph<'_, T>,
    xs: Var,
    cell: &LstmParams,
    reverse: bool,
) -> Var {
    let steps = g.shape(xs).0;
    let hd = cell.hidden;
    let (w_x, w_h, b) = (g.param(cell.w_x), g.param(cell.w_h), g.param(cell.b));
    let projected = g.matmul(xs, w_x);
    let projected = g.add_row(projected, b);
    let mut h = g.input(Matrix::zeros(1, hd));
    let mut c = g.input(Matrix::zeros(1, hd));
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let xt = g.slice_rows(projected, t, 1);
        let rec = g.matmul(h, w_h);
        let gates = g.add(xt, rec);
        let i = g.slice_cols(gates, 0, hd);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, hd, hd);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * hd, hd);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
    }
    h
}

/// Encodes the flattened ingredient ids to a `1 × q` row: final forward state
/// followed by final backward state.
pub fn ingredient_encoder_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: ParamId,
    ids: &[usize],
    params: &IngredientEncoderParams,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Empty("recipe has no ingredient tokens".into()));
    }
    let xs = g.gather(table, ids, Some(PAD_ID));
    let fwd = lstm_final_state(g, xs, &params.forward, false);
    let bwd = lstm_final_state(g, xs, &params.backward, true);
    Ok(g.concat_cols(&[fwd, bwd]))
}

/// Stand-alone ingredient encoding of a list of ingredient lines.
pub fn encode_ingredients<T: Scalar>(
    ingredient_tokens: &[Vec<usize>],
    store: &ParamStore<T>,
    params: &IngredientEncoderParams,
    table: ParamId,
) -> Result<Vec<T>> {
    if ingredient_tokens.is_empty() {
        return Err(Error::Empty("ingredient list is empty".into()));
    }
    let vocab = store.value(table).rows();
    let flat: Vec<usize> = ingredient_tokens.iter().flatten().copied().collect();
    if let Some(&id) = flat.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, size: vocab });
    }
    let mut g = Graph::inference(store);
    let out = ingredient_encoder_graph(&mut g, table, &flat, params)?;
    Ok(g.value(out).as_slice().to_vec())
}
