//! Trainable top layer mapping precomputed image features into the joint space.
//!
//! The feature extractor itself is not modelled: stored features are constants,
//! so "freezing the backbone" amounts to never differentiating through them.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::ImageFeature;
use crate::embedding::{JointEmbedding, Modality};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, Matrix};
use crate::text_encoder::FusedEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageHeadParams {
    /// `D × e`
    pub w: ParamId,
    /// `1 × e`
    pub b: ParamId,
}

impl ImageHeadParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        e: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.insert(
                "image.w",
                ParamGroup::Image,
                Matrix::xavier(feature_dim, e, rng),
            ),
            b: store.insert("image.b", ParamGroup::Image, Matrix::zeros(1, e)),
        }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            w: crate::text_encoder::lookup(store, "image.w")?,
            b: crate::text_encoder::lookup(store, "image.b")?,
        })
    }

    pub fn feature_dim<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).rows()
    }
}

/// Affine map, `tanh`, then L2 normalisation of a `1 × D` feature node.
pub fn image_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    feature: Var,
    params: &ImageHeadParams,
) -> Result<FusedEmbedding> {
    let d = params.feature_dim(g.store());
    let (rows, cols) = g.shape(feature);
    if rows != 1 || cols != d {
        return Err(Error::Shape(format!(
            "image feature is {rows}x{cols}, head expects 1x{d}"
        )));
    }
    let (w, b) = (g.param(params.w), g.param(params.b));
    let pre = g.matmul(feature, w);
    let pre = g.add_row(pre, b);
    let activation = g.tanh(pre);
    let degenerate = l2_norm(g.value(activation).as_slice()) == T::zero();
    let embedding = g.l2_normalize_rows(activation);
    Ok(FusedEmbedding {
        embedding,
        activation,
        degenerate,
    })
}

pub fn feature_row<T: Scalar>(feature: &ImageFeature) -> Matrix<T> {
    Matrix::row_vector(feature.values.iter().map(|&v| T::lit(v)).collect())
}

pub fn encode_image<T: Scalar>(
    feature: &ImageFeature,
    store: &ParamStore<T>,
    params: &ImageHeadParams,
) -> Result<JointEmbedding<T>> {
    let mut g = Graph::inference(store);
    let f = g.input(feature_row(feature));
    let out = image_graph(&mut g, f, params)?;
    Ok(JointEmbedding {
        id: feature.id.clone(),
        modality: Modality::Image,
        vector: g.value(out.embedding).as_slice().to_vec(),
        degenerate: out.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature(values: Vec<f64>) -> ImageFeature {
        ImageFeature {
            id: "img".into(),
            values,
        }
    }

    #[test]
    fn output_is_unit_length_and_activations_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = ImageHeadParams::init(&mut store, 6, 4, &mut rng);
        for _ in 0..10 {
            let f = feature(Matrix::<f64>::random_normal(1, 6, 3.0, &mut rng).into_vec());
            let e = encode_image(&f, &store, &head).unwrap();
            assert!((l2_norm(&e.vector) - 1.0).abs() < 1e-6);
            let mut g = Graph::inference(&store);
            let fv = g.input(feature_row(&f));
            let out = image_graph(&mut g, fv, &head).unwrap();
            assert!(g
                .value(out.activation)
                .as_slice()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_head_matches_hand_evaluation() {
        let mut store = ParamStore::<f64>::new();
        let head = ImageHeadParams {
            w: store.insert("image.w", ParamGroup::Image, Matrix::identity(3)),
            b: store.insert("image.b", ParamGroup::Image, Matrix::zeros(1, 3)),
        };
        let x = [0.6, 0.0, 0.8];
        let e = encode_image(&feature(x.to_vec()), &store, &head).unwrap();
        let t: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
        let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        for (got, tj) in e.vector.iter().zip(&t) {
            assert!((got - tj / n).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_and_dimension_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let head = ImageHeadParams::init(&mut store, 3, 2, &mut rng);
        let f = feature(vec![0.1, 0.2, 0.3]);
        assert_eq!(
            encode_image(&f, &store, &head).unwrap(),
            encode_image(&f, &store, &head).unwrap()
        );
        assert!(matches!(
            encode_image(&feature(vec![1.0; 4]), &store, &head),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_activation_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let head = ImageHeadParams {
            w: store.insert("image.w", ParamGroup::Image, Matrix::zeros(2, 2)),
            b: store.insert("image.b", ParamGroup::Image, Matrix::zeros(1, 2)),
        };
        let e = encode_image(&feature(vec![1.0, 1.0]), &store, &head).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.vector, vec![0.0, 0.0]);
    }
}
