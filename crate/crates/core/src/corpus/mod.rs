//! Recipe corpora: ingestion, cleaning, tokenisation, trimming and encoding.

mod clean;
mod features;
mod io;
mod split;
mod synthetic;
mod trim;
mod vocab;

pub use clean::{filter_noisy_instructions, is_noise_sentence, tokenize, Cleaned, Rejection};
pub use features::{FeatureStore, ImageFeature};
pub use io::{load_corpus, load_tokenized, write_corpus, write_tokenized, LoadReport, RecordError};
pub use split::CorpusSplit;
pub use synthetic::{generate_synthetic_corpus, GeneratorSpec, SyntheticCorpus};
pub use trim::{trim_instructions, trim_lengths};
pub use vocab::{build_vocabulary, Vocabulary, PAD_ID, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub class_id: usize,
    pub image_feature_ref: String,
}

/// Integer-encoded recipe.
///
/// `boundaries` holds `instructions + 1` offsets into `instruction_tokens`,
/// starting at 0 and ending at its length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedRecipe {
    pub id: String,
    pub ingredient_tokens: Vec<Vec<usize>>,
    pub instruction_tokens: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub class_id: usize,
    pub image_feature_ref: String,
}

impl TokenizedRecipe {
    pub fn instruction_lengths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn instruction(&self, i: usize) -> &[usize] {
        &self.instruction_tokens[self.boundaries[i]..self.boundaries[i + 1]]
    }

    pub fn num_instructions(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    /// Ingredient lines concatenated in the given order.
    pub fn flat_ingredients(&self) -> Vec<usize> {
        self.ingredient_tokens.iter().flatten().copied().collect()
    }

    /// Checks the structural invariants against a vocabulary size and token cap.
    pub fn validate(&self, vocab_size: usize, cap: usize) -> Result<()> {
        let total = self.instruction_tokens.len();
        if self.boundaries.first() != Some(&0) || self.boundaries.last() != Some(&total) {
            return Err(Error::Shape(format!(
                "recipe `{}`: boundaries do not partition {total} instruction tokens",
                self.id
            )));
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Shape(format!(
                "recipe `{}`: boundaries not sorted",
                self.id
            )));
        }
        if total > cap {
            return Err(Error::Shape(format!(
                "recipe `{}`: {total} instruction tokens exceed cap {cap}",
                self.id
            )));
        }
        for &id in self
            .instruction_tokens
            .iter()
            .chain(self.ingredient_tokens.iter().flatten())
        {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Tokenises, maps and trims one recipe. Rejections from cleaning propagate as errors.
pub fn encode_tokens(recipe: &Recipe, vocab: &Vocabulary, cap: usize) -> Result<TokenizedRecipe> {
    let cleaned = match filter_noisy_instructions(recipe) {
        Cleaned::Kept(r) => r,
        Cleaned::Rejected(why) => {
            return Err(Error::Rejected {
                id: recipe.id.clone(),
                reason: why.to_string(),
            })
        }
    };
    let ingredient_tokens: Vec<Vec<usize>> = cleaned
        .ingredients
        .iter()
        .map(|line| {
            tokenize(line)
                .iter()
                .map(|t| vocab.id_of(t))
                .collect::<Vec<_>>()
        })
        .filter(|ids: &Vec<usize>| !ids.is_empty())
        .collect();
    if ingredient_tokens.is_empty() {
        return Err(Error::Rejected {
            id: recipe.id.clone(),
            reason: Rejection::NoIngredients.to_string(),
        });
    }
    let mut instruction_tokens = Vec::new();
    let mut boundaries = vec![0];
    for sentence in &cleaned.instructions {
        instruction_tokens.extend(tokenize(sentence).iter().map(|t| vocab.id_of(t)));
        boundaries.push(instruction_tokens.len());
    }
    let encoded = TokenizedRecipe {
        id: cleaned.id,
        ingredient_tokens,
        instruction_tokens,
        boundaries,
        class_id: cleaned.class_id,
        image_feature_ref: cleaned.image_feature_ref,
    };
    trim_instructions(&encoded, cap)
}

/// Result of encoding a whole corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub vocab: Vocabulary,
    pub recipes: Vec<TokenizedRecipe>,
    /// `(recipe id, reason)` for every recipe dropped by cleaning.
    pub rejected: Vec<(String, String)>,
}

/// Builds the vocabulary over `recipes` and encodes each of them.
pub fn preprocess(recipes: &[Recipe], min_freq: usize, cap: usize) -> Result<Preprocessed> {
    let vocab = build_vocabulary(recipes, min_freq)?;
    let mut out = Vec::with_capacity(recipes.len());
    let mut rejected = Vec::new();
    for r in recipes {
        match encode_tokens(r, &vocab, cap) {
            Ok(t) => out.push(t),
            Err(Error::Rejected { id, reason }) => rejected.push((id, reason)),
            Err(e) => return Err(e),
        }
    }
    Ok(Preprocessed {
        vocab,
        recipes: out,
        rejected,
    })
}

/// The recipes whose ids are listed, in list order.
pub fn select<'a>(recipes: &'a [TokenizedRecipe], ids: &[String]) -> Result<Vec<TokenizedRecipe>> {
    let index: std::collections::HashMap<&str, &'a TokenizedRecipe> =
        recipes.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::UnknownRecipe(id.clone()))
        })
        .collect()
}
