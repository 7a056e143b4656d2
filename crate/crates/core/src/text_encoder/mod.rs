//! Recipe text path: word embeddings, positional encoding, self-attention
//! instruction encoder, bidirectional ingredient encoder, ingredient attention
//! and fusion into the joint space.

mod fusion;
mod ingredient_attention;
mod ingredient_encoder;
mod positional;
mod self_attention;
mod word2vec;

pub use fusion::{fuse_and_project, fusion_graph, FusedEmbedding, FusionParams};
pub use ingredient_attention::{
    ingredient_attention, ingredient_attention_graph, IngredientAttentionParams,
};
pub use ingredient_encoder::{
    encode_ingredients, ingredient_encoder_graph, IngredientEncoderParams, LstmParams,
};
pub use positional::{positional_encode, sinusoidal_table};
pub use self_attention::{
    encoder_graph, self_attention_encode, AttentionProjections, EncoderLayerParams, EncoderParams,
};
pub use word2vec::{pretrain_word_embeddings, SkipGramConfig, WordEmbeddingTable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{TokenizedRecipe, PAD_ID};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Dimensions of the text path and the joint space.
///
/// The batch size `b` lives in the training configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    /// Instruction positions (token cap per recipe).
    pub p: usize,
    /// Word embedding width.
    pub w: usize,
    /// Ingredient-attention projection width; `d_k = h`.
    pub h: usize,
    /// Ingredient representation length (both LSTM directions together).
    pub q: usize,
    /// Ingredient-attention outputs per recipe.
    pub n: usize,
    /// Joint embedding dimension.
    pub e: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Query counts of optional earlier ingredient-attention steps; the last step always has `n`.
    pub ia_intermediate: Vec<usize>,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ShapeConfig {
    /// Full-scale dimensions (300 words, 512-d embeddings, 600-d ingredients).
    pub fn full() -> Self {
        Self {
            p: 300,
            w: 512,
            h: 64,
            q: 600,
            n: 4,
            e: 1024,
            heads: 4,
            ffn_dim: 1024,
            layers: 2,
            ia_intermediate: Vec::new(),
        }
    }

    /// Laptop-scale dimensions used by the verification suite.
    pub fn desk() -> Self {
        Self {
            p: 16,
            w: 32,
            h: 16,
            q: 24,
            n: 2,
            e: 32,
            heads: 4,
            ffn_dim: 64,
            layers: 2,
            ia_intermediate: Vec::new(),
        }
    }

    pub fn d_k(&self) -> usize {
        self.h
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("shape.p", self.p),
            ("shape.w", self.w),
            ("shape.h", self.h),
            ("shape.q", self.q),
            ("shape.n", self.n),
            ("shape.e", self.e),
            ("shape.heads", self.heads),
            ("shape.ffn_dim", self.ffn_dim),
            ("shape.layers", self.layers),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.w.is_multiple_of(self.heads) {
            return Err(Error::config(
                "shape.heads",
                format!("w = {} is not divisible by {} heads", self.w, self.heads),
            ));
        }
        if !self.q.is_multiple_of(2) {
            return Err(Error::config(
                "shape.q",
                "must be even (two LSTM directions)",
            ));
        }
        if self.ia_intermediate.contains(&0) {
            return Err(Error::config(
                "shape.ia_intermediate",
                "query counts must be positive",
            ));
        }
        Ok(())
    }

    /// Query count of every ingredient-attention step, in order.
    pub fn ia_steps(&self) -> Vec<usize> {
        let mut steps = self.ia_intermediate.clone();
        steps.push(self.n);
        steps
    }
}

/// Parameter handles of the whole text path.
#[derive(Debug, Clone, PartialEq)]
pub struct TextParams {
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    pub ingredients: IngredientEncoderParams,
    pub attention: Vec<IngredientAttentionParams>,
    pub fusion: FusionParams,
}

impl TextParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        shape: &ShapeConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let mut table = Matrix::random_uniform(vocab_size, shape.w, 0.1, rng);
        table.row_mut(PAD_ID).fill(T::zero());
        let embedding = store.insert("text.word_embedding", ParamGroup::Text, table);
        let encoder = EncoderParams::init(store, "text.encoder", shape, rng);
        let ingredients =
            IngredientEncoderParams::init(store, "text.ingredients", shape.w, shape.q, rng);
        let attention = shape
            .ia_steps()
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                IngredientAttentionParams::init(
                    store,
                    &format!("text.ingredient_attention.{i}"),
                    shape,
                    n,
                    rng,
                )
            })
            .collect();
        let fusion = FusionParams::init(
            store,
            "text.fusion",
            shape.q + shape.n * shape.w,
            shape.e,
            rng,
        );
        Self {
            embedding,
            encoder,
            ingredients,
            attention,
            fusion,
        }
    }

    /// Re-resolves handles by name in a store laid out by [`TextParams::init`].
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, shape: &ShapeConfig) -> Result<Self> {
        Ok(Self {
            embedding: lookup(store, "text.word_embedding")?,
            encoder: EncoderParams::lookup(store, "text.encoder", shape)?,
            ingredients: IngredientEncoderParams::lookup(store, "text.ingredients", shape.q)?,
            attention: shape
                .ia_steps()
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    IngredientAttentionParams::lookup(
                        store,
                        &format!("text.ingredient_attention.{i}"),
                        shape,
                        n,
                    )
                })
                .collect::<Result<_>>()?,
            fusion: FusionParams::lookup(store, "text.fusion")?,
        })
    }
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

/// Graph nodes produced by one recipe's text forward pass.
#[derive(Debug, Clone)]
pub struct TextForward {
    pub embedding: Var,
    /// First-step ingredient attention weights, `n₀ × p`.
    pub attention: Var,
    /// `true` at real (non-padding) instruction positions.
    pub mask: Vec<bool>,
    pub degenerate: bool,
}

/// Instruction ids padded with `PAD_ID` (or truncated) to exactly `p` positions.
pub fn padded_instruction_ids(recipe: &TokenizedRecipe, p: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = recipe.instruction_tokens.iter().copied().take(p).collect();
    ids.resize(p, PAD_ID);
    ids
}

/// Full text path for one recipe inside `g`.
pub fn text_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    params: &TextParams,
    shape: &ShapeConfig,
    pe: &Matrix<T>,
    recipe: &TokenizedRecipe,
) -> Result<TextForward> {
    let vocab_size = g.store().value(params.embedding).rows();
    let ids = padded_instruction_ids(recipe, shape.p);
    for &id in ids.iter().chain(recipe.ingredient_tokens.iter().flatten()) {
        if id >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }
    }
    let mask: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }

    let words = g.gather(params.embedding, &ids, Some(PAD_ID));
    let pos = g.input(pe.clone());
    let x = g.add(words, pos);
    let (encoded, _) = encoder_graph(g, x, &mask, &params.encoder)?;

    let flat = recipe.flat_ingredients();
    let ing = ingredient_encoder_graph(g, params.embedding, &flat, &params.ingredients)?;

    let mut inst = encoded;
    let mut step_mask = mask.clone();
    let mut first_weights = None;
    for step in &params.attention {
        let (out, weights) = ingredient_attention_graph(g, inst, &step_mask, ing, step)?;
        first_weights.get_or_insert(weights);
        step_mask = vec![true; step.queries];
        inst = out;
    }
    let fused = fusion_graph(g, ing, inst, &params.fusion)?;
    Ok(TextForward {
        embedding: fused.embedding,
        attention: first_weights.expect("at least one ingredient-attention step"),
        mask,
        degenerate: fused.degenerate,
    })
}
