use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, Matrix};

use super::lookup;

/// Affine map from `[ingredients | flattened attention outputs]` to the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl FusionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.insert(
                format!("{prefix}.w"),
                ParamGroup::Text,
                Matrix::xavier(input, output, rng),
            ),
            b: store.insert(
                format!("{prefix}.b"),
                ParamGroup::Text,
                Matrix::zeros(1, output),
            ),
        }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: lookup(store, &format!("{prefix}.w"))?,
            b: lookup(store, &format!("{prefix}.b"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedEmbedding {
    /// Unit-length `1 × e` row, or all zeros when degenerate.
    pub embedding: Var,
    /// `tanh` activation before normalisation.
    pub activation: Var,
    pub degenerate: bool,
}

pub fn fusion_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    ing: Var,
    ia: Var,
    params: &FusionParams,
) -> Result<FusedEmbedding> {
    let (n, w) = g.shape(ia);
    let q = g.shape(ing).1;
    let expected = g.store().value(params.w).rows();
    if q + n * w != expected {
        return Err(Error::Shape(format!(
            "fusion input {q} + {n}x{w} does not match projection rows {expected}"
        )));
    }
    let flat = g.reshape(ia, 1, n * w);
    let joined = g.concat_cols(&[ing, flat]);
    let (wv, bv) = (g.param(params.w), g.param(params.b));
    let pre = g.matmul(joined, wv);
    let pre = g.add_row(pre, bv);
    let activation = g.tanh(pre);
    let degenerate = l2_norm(g.value(activation).as_slice()) == T::zero();
    let embedding = g.l2_normalize_rows(activation);
    Ok(FusedEmbedding {
        embedding,
        activation,
        degenerate,
    })
}

/// Stand-alone fusion. Returns the unit embedding and a degeneracy flag.
pub fn fuse_and_project<T: Scalar>(
    ing: &[T],
    ia: &Matrix<T>,
    store: &ParamStore<T>,
    params: &FusionParams,
) -> Result<(Vec<T>, bool)> {
    let mut g = Graph::inference(store);
    let iv = g.input(Matrix::row_vector(ing.to_vec()));
    let av = g.input(ia.clone());
    let fused = fusion_graph(&mut g, iv, av, params)?;
    Ok((
        g.value(fused.embedding).as_slice().to_vec(),
        fused.degenerate,
    ))
}
