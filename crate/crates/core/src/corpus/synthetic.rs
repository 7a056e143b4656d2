//! Synthetic recipe corpora with a controllable image-text signal.
//!
//! Each class owns an ingredient pool and a set of instruction templates built
//! from class-specific words. A recipe's image feature is a frozen random
//! projection of its indicator vector `[class one-hot | ingredient bag]`, plus
//! isotropic Gaussian noise of scale `noise_sigma`.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{CorpusSplit, FeatureStore, ImageFeature, Recipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub recipes_per_class: usize,
    /// Size of each class's private ingredient pool.
    pub class_ingredients: usize,
    /// Ingredients shared by all classes.
    pub shared_ingredients: usize,
    /// Inclusive range of class-pool ingredients per recipe.
    pub class_ingredients_per_recipe: (usize, usize),
    /// Inclusive range of shared ingredients per recipe.
    pub shared_ingredients_per_recipe: (usize, usize),
    pub templates_per_class: usize,
    /// Inclusive range of instruction sentences per recipe.
    pub instructions_per_recipe: (usize, usize),
    /// Probability that a recipe carries an extra punctuation-only instruction.
    pub noise_instruction_rate: f64,
    /// Image feature dimension `D`.
    pub feature_dim: usize,
    /// Standard deviation of the additive feature noise.
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            recipes_per_class: 100,
            class_ingredients: 12,
            shared_ingredients: 16,
            class_ingredients_per_recipe: (3, 6),
            shared_ingredients_per_recipe: (0, 2),
            templates_per_class: 6,
            instructions_per_recipe: (3, 6),
            noise_instruction_rate: 0.05,
            feature_dim: 64,
            noise_sigma: 0.05,
            train_fraction: 0.6,
            validation_fraction: 0.1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.num_classes == 0 {
            return bad("num_classes", "must be at least 1".into());
        }
        if self.recipes_per_class == 0 {
            return bad("recipes_per_class", "must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(
                "noise_sigma",
                format!("must be finite and >= 0, got {}", self.noise_sigma),
            );
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1".into());
        }
        let (lo, hi) = self.class_ingredients_per_recipe;
        if lo == 0 || lo > hi || hi > self.class_ingredients {
            return bad(
                "class_ingredients_per_recipe",
                format!(
                    "need 1 <= min <= max <= class_ingredients ({})",
                    self.class_ingredients
                ),
            );
        }
        let (lo, hi) = self.shared_ingredients_per_recipe;
        if lo > hi || hi > self.shared_ingredients {
            return bad(
                "shared_ingredients_per_recipe",
                format!(
                    "need min <= max <= shared_ingredients ({})",
                    self.shared_ingredients
                ),
            );
        }
        let (lo, hi) = self.instructions_per_recipe;
        if lo == 0 || lo > hi {
            return bad("instructions_per_recipe", "need 1 <= min <= max".into());
        }
        if self.templates_per_class == 0 {
            return bad("templates_per_class", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_instruction_rate) {
            return bad("noise_instruction_rate", "must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Length of the indicator vector the projection acts on.
    pub fn indicator_dim(&self) -> usize {
        self.num_classes + self.num_classes * self.class_ingredients + self.shared_ingredients
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: GeneratorSpec,
    pub recipes: Vec<Recipe>,
    pub features: FeatureStore,
    pub split: CorpusSplit,
    /// Frozen `indicator_dim × D` projection.
    pub projection: Matrix<f64>,
    /// Active indicator coordinates per recipe, aligned with `recipes`.
    pub indicators: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    /// Noise-free feature of recipe `i`: the projection of its indicator vector.
    pub fn clean_feature(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.projection.cols()];
        for &k in &self.indicators[i] {
            for (o, &p) in out.iter_mut().zip(self.projection.row(k)) {
                *o += p;
            }
        }
        out
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.recipes.iter().position(|r| r.id == id)
    }
}

struct ClassLexicon {
    dish: String,
    ingredients: Vec<String>,
    templates: Vec<Vec<Slot>>,
}

#[derive(Clone)]
enum Slot {
    Word(String),
    Ingredient,
    Number,
}

const FILLERS: &[&str] = &[
    "the", "and", "with", "until", "in", "a", "for", "minutes", "then", "over", "into", "bowl",
];
const UNITS: &[&str] = &["cup", "cups", "tbsp", "tsp", "g", "pinch", "handful"];
const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("non-empty"));
            w.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        if !FILLERS.contains(&w.as_str()) && taken.insert(w.clone()) {
            return w;
        }
    }
}

fn build_template(
    rng: &mut ChaCha8Rng,
    verbs: &[String],
    adjs: &[String],
    tools: &[String],
) -> Vec<Slot> {
    let w = |s: &str| Slot::Word(s.to_owned());
    let verb = Slot::Word(verbs.choose(rng).expect("verbs").clone());
    let adj = Slot::Word(adjs.choose(rng).expect("adjs").clone());
    let tool = Slot::Word(tools.choose(rng).expect("tools").clone());
    match rng.random_range(0..5) {
        0 => vec![verb, w("the"), Slot::Ingredient, w("until"), adj],
        1 => vec![
            verb,
            Slot::Ingredient,
            w("and"),
            Slot::Ingredient,
            w("in"),
            w("a"),
            tool,
        ],
        2 => vec![
            w("add"),
            w("the"),
            Slot::Ingredient,
            w("then"),
            verb,
            w("for"),
            Slot::Number,
            w("minutes"),
        ],
        3 => vec![verb, Slot::Ingredient, w("with"), Slot::Ingredient, adj],
        _ => vec![
            w("serve"),
            adj,
            w("with"),
            Slot::Ingredient,
            w("over"),
            tool,
        ],
    }
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic synthetic corpus: same `(spec, seed)` gives an identical result.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let mut taken = HashSet::new();

    let shared: Vec<String> = (0..spec.shared_ingredients)
        .map(|_| pseudo_word(&mut rng, &mut taken))
        .collect();
    let lexicons: Vec<ClassLexicon> = (0..spec.num_classes)
        .map(|_| {
            let dish = pseudo_word(&mut rng, &mut taken);
            let ingredients = (0..spec.class_ingredients)
                .map(|_| pseudo_word(&mut rng, &mut taken))
                .collect();
            let verbs: Vec<String> = (0..3).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
            let adjs: Vec<String> = (0..2).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
            let tools: Vec<String> = (0..2).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
            let templates = (0..spec.templates_per_class)
                .map(|_| build_template(&mut rng, &verbs, &adjs, &tools))
                .collect();
            ClassLexicon {
                dish,
                ingredients,
                templates,
            }
        })
        .collect();

    let indicator_dim = spec.indicator_dim();
    let (lo, hi) = spec.class_ingredients_per_recipe;
    let mean_active = 1.0
        + (lo + hi) as f64 / 2.0
        + (spec.shared_ingredients_per_recipe.0 + spec.shared_ingredients_per_recipe.1) as f64
            / 2.0;
    let projection = Matrix::<f64>::random_normal(
        indicator_dim,
        spec.feature_dim,
        1.0 / mean_active.sqrt(),
        &mut rng,
    );

    let shared_offset = spec.num_classes + spec.num_classes * spec.class_ingredients;
    let total = spec.num_classes * spec.recipes_per_class;
    let mut recipes = Vec::with_capacity(total);
    let mut indicators = Vec::with_capacity(total);
    let mut features = FeatureStore::new(spec.feature_dim);

    for idx in 0..total {
        let class = idx / spec.recipes_per_class;
        let lex = &lexicons[class];
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, idx as u64));

        let n_class = r.random_range(lo..=hi);
        let mut class_pick: Vec<usize> = (0..spec.class_ingredients).collect();
        class_pick.shuffle(&mut r);
        class_pick.truncate(n_class);
        let (slo, shi) = spec.shared_ingredients_per_recipe;
        let n_shared = r.random_range(slo..=shi);
        let mut shared_pick: Vec<usize> = (0..spec.shared_ingredients).collect();
        shared_pick.shuffle(&mut r);
        shared_pick.truncate(n_shared);

        let names: Vec<&str> = class_pick
            .iter()
            .map(|&k| lex.ingredients[k].as_str())
            .chain(shared_pick.iter().map(|&k| shared[k].as_str()))
            .collect();
        let ingredients: Vec<String> = names
            .iter()
            .map(|name| {
                format!(
                    "{} {} {name}",
                    r.random_range(1..=4),
                    UNITS.choose(&mut r).expect("units")
                )
            })
            .collect();

        let (ilo, ihi) = spec.instructions_per_recipe;
        let n_inst = r.random_range(ilo..=ihi);
        let mut instructions: Vec<String> = (0..n_inst)
            .map(|_| {
                let template = lex.templates.choose(&mut r).expect("templates");
                let words: Vec<String> = template
                    .iter()
                    .map(|slot| match slot {
                        Slot::Word(w) => w.clone(),
                        Slot::Ingredient => names.choose(&mut r).expect("ingredients").to_string(),
                        Slot::Number => r.random_range(2..=30).to_string(),
                    })
                    .collect();
                let mut s = words.join(" ");
                s.push('.');
                capitalize(&s)
            })
            .collect();
        if r.random_bool(spec.noise_instruction_rate) {
            let at = r.random_range(0..=instructions.len());
            instructions.insert(at, "...".to_owned());
        }

        let mut active: Vec<usize> = vec![class];
        active.extend(
            class_pick
                .iter()
                .map(|&k| spec.num_classes + class * spec.class_ingredients + k),
        );
        active.extend(shared_pick.iter().map(|&k| shared_offset + k));
        active.sort_unstable();

        let mut values = vec![0.0; spec.feature_dim];
        for &k in &active {
            for (v, &p) in values.iter_mut().zip(projection.row(k)) {
                *v += p;
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in values.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += spec.noise_sigma * z;
            }
        }

        let id = format!("r{idx:05}");
        features.insert(ImageFeature {
            id: id.clone(),
            values,
        })?;
        recipes.push(Recipe {
            title: capitalize(&format!("{} {}", names[0], lex.dish)),
            id: id.clone(),
            ingredients,
            instructions,
            class_id: class,
            image_feature_ref: id,
        });
        indicators.push(active);
    }

    let ids: Vec<String> = recipes.iter().map(|r| r.id.clone()).collect();
    let split = CorpusSplit::random(
        &ids,
        spec.train_fraction,
        spec.validation_fraction,
        derive_seed(seed, 2, 0),
    )?;

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        recipes,
        features,
        split,
        projection,
        indicators,
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::filter_noisy_instructions;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            num_classes: 4,
            recipes_per_class: 10,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small(), 7).unwrap();
        let b = generate_synthetic_corpus(&small(), 7).unwrap();
        assert_eq!(a.recipes, b.recipes);
        assert_eq!(a.features, b.features);
        assert_eq!(a.split, b.split);
        let c = generate_synthetic_corpus(&small(), 8).unwrap();
        assert_ne!(a.recipes, c.recipes);
    }

    #[test]
    fn noiseless_features_depend_only_on_ingredients() {
        let spec = GeneratorSpec {
            noise_sigma: 0.0,
            class_ingredients: 3,
            class_ingredients_per_recipe: (3, 3),
            shared_ingredients_per_recipe: (0, 0),
            ..small()
        };
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        // every recipe of a class has the same full ingredient set
        let f0 = &c.features.get(&c.recipes[0].id).unwrap().values;
        let f1 = &c.features.get(&c.recipes[1].id).unwrap().values;
        assert_eq!(c.indicators[0], c.indicators[1]);
        assert_eq!(f0, f1);
        for i in 0..c.recipes.len() {
            assert_eq!(
                c.features.get(&c.recipes[i].id).unwrap().values,
                c.clean_feature(i)
            );
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let c = generate_synthetic_corpus(&GeneratorSpec::default(), 3).unwrap();
        assert_eq!(c.recipes.len(), 2000);
        let mut hist = [0; 20];
        for r in &c.recipes {
            hist[r.class_id] += 1;
        }
        assert!(hist.iter().all(|&h| h == 100));
        assert!(c
            .recipes
            .iter()
            .all(|r| filter_noisy_instructions(r).kept().is_some()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let zero = GeneratorSpec {
            num_classes: 0,
            ..small()
        };
        assert!(generate_synthetic_corpus(&zero, 1).is_err());
        let neg = GeneratorSpec {
            noise_sigma: -0.1,
            ..small()
        };
        assert!(
            matches!(generate_synthetic_corpus(&neg, 1), Err(Error::Config { key, .. }) if key == "noise_sigma")
        );
    }
}
