use std::fmt;

use super::Recipe;

/// Lowercased word tokens: maximal runs of alphanumeric characters.
///
/// Punctuation never forms a token, so "Mix flour." yields `["mix", "flour"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// A sentence is noise when it contains no word token at all.
pub fn is_noise_sentence(sentence: &str) -> bool {
    !sentence.chars().any(char::is_alphanumeric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    NoInstructions,
    NoIngredients,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NoInstructions => f.write_str("no instructions remain after cleaning"),
            Rejection::NoIngredients => f.write_str("no ingredients remain after cleaning"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cleaned {
    Kept(Recipe),
    Rejected(Rejection),
}

impl Cleaned {
    pub fn kept(self) -> Option<Recipe> {
        match self {
            Cleaned::Kept(r) => Some(r),
            Cleaned::Rejected(_) => None,
        }
    }
}

/// Drops punctuation-only instruction sentences and empty ingredient lines.
pub fn filter_noisy_instructions(recipe: &Recipe) -> Cleaned {
    let instructions: Vec<String> = recipe
        .instructions
        .iter()
        .filter(|s| !is_noise_sentence(s))
        .cloned()
        .collect();
    let ingredients: Vec<String> = recipe
        .ingredients
        .iter()
        .filter(|s| !is_noise_sentence(s))
        .cloned()
        .collect();
    if ingredients.is_empty() {
        return Cleaned::Rejected(Rejection::NoIngredients);
    }
    if instructions.is_empty() {
        return Cleaned::Rejected(Rejection::NoInstructions);
    }
    Cleaned::Kept(Recipe {
        ingredients,
        instructions,
        ..recipe.clone()
    })
}
