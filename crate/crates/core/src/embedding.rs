use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// A vector in the shared space, tagged with its source.
///
/// `vector` has unit length unless `degenerate` is set, in which case the
/// pre-normalisation activation was zero and `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding<T> {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<T>,
    pub degenerate: bool,
}

impl<T: Scalar> JointEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}
