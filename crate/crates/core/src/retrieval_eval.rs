//! Image-to-recipe retrieval metrics over random candidate subsets, plus
//! attention and embedding exports.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureStore, ImageFeature, TokenizedRecipe, Vocabulary};
use crate::embedding::{JointEmbedding, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{dot, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Image queries ranked against recipe texts.
    #[default]
    ImageToRecipe,
    RecipeToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub subsets: usize,
    pub subset_size: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subsets: 10,
            subset_size: 1000,
            ks: vec![1, 5, 10],
            seed: 0,
            direction: Direction::ImageToRecipe,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsets == 0 {
            return Err(Error::config("eval.subsets", "must be positive"));
        }
        if self.subset_size == 0 {
            return Err(Error::config("eval.subset_size", "must be positive"));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k >= self.subset_size) {
            return Err(Error::config(
                "eval.ks",
                format!("K={k} must lie in [1, subset_size)"),
            ));
        }
        Ok(())
    }
}

/// Anything that maps recipes and image features into the joint space.
pub trait Embedder<T: Scalar> {
    fn embed_text(&self, recipe: &TokenizedRecipe) -> Result<JointEmbedding<T>>;
    /// Embeds the image paired with recipe `id`.
    fn embed_image(&self, id: &str, feature: &ImageFeature) -> Result<JointEmbedding<T>>;
}

impl<T: Scalar> Embedder<T> for Model<T> {
    fn embed_text(&self, recipe: &TokenizedRecipe) -> Result<JointEmbedding<T>> {
        self.encode_recipe(recipe)
    }

    fn embed_image(&self, id: &str, feature: &ImageFeature) -> Result<JointEmbedding<T>> {
        self.encode_image(id, feature)
    }
}

/// Test double whose text embedding is defined as the paired image embedding
/// (the normalised raw feature), so retrieval is perfect by construction.
#[derive(Debug, Clone)]
pub struct PairedFeatureOracle<'a> {
    pub features: &'a FeatureStore,
}

impl PairedFeatureOracle<'_> {
    fn normalised(&self, id: &str, values: &[f64]) -> Result<JointEmbedding<f64>> {
        let n = l2_norm(values);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(JointEmbedding {
            id: id.to_owned(),
            modality: Modality::Image,
            vector: values.iter().map(|v| v / n).collect(),
            degenerate: false,
        })
    }
}

impl Embedder<f64> for PairedFeatureOracle<'_> {
    fn embed_text(&self, recipe: &TokenizedRecipe) -> Result<JointEmbedding<f64>> {
        let f = self.features.require(&recipe.image_feature_ref)?;
        let mut e = self.normalised(&recipe.id, &f.values)?;
        e.modality = Modality::Text;
        Ok(e)
    }

    fn embed_image(&self, id: &str, feature: &ImageFeature) -> Result<JointEmbedding<f64>> {
        self.normalised(id, &feature.values)
    }
}

/// Text and image embeddings of a set of recipes, index-aligned.
#[derive(Debug, Clone)]
pub struct EmbeddingSet<T> {
    pub text: Vec<JointEmbedding<T>>,
    pub image: Vec<JointEmbedding<T>>,
    pub class_ids: Vec<usize>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn embed_recipes<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    recipes: &[TokenizedRecipe],
    features: &FeatureStore,
) -> Result<EmbeddingSet<T>> {
    let mut set = EmbeddingSet {
        text: Vec::with_capacity(recipes.len()),
        image: Vec::with_capacity(recipes.len()),
        class_ids: Vec::with_capacity(recipes.len()),
        index: HashMap::with_capacity(recipes.len()),
    };
    for r in recipes {
        let feature = features
            .get(&r.image_feature_ref)
            .ok_or_else(|| Error::MissingFeature(r.image_feature_ref.clone()))?;
        set.index.insert(r.id.clone(), set.text.len());
        set.text.push(embedder.embed_text(r)?);
        set.image.push(embedder.embed_image(&r.id, feature)?);
        set.class_ids.push(r.class_id);
    }
    Ok(set)
}

/// `ids.len()`-choose-`subset_size` draws, one per subset, without replacement
/// inside each subset.
pub fn build_subsets(ids: &[String], cfg: &EvalConfig) -> Result<Vec<Vec<String>>> {
    cfg.validate()?;
    if cfg.subset_size > ids.len() {
        return Err(Error::config(
            "eval.subset_size",
            format!("{} exceeds the pool of {} ids", cfg.subset_size, ids.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.subsets)
        .map(|_| {
            sample(&mut rng, ids.len(), cfg.subset_size)
                .into_iter()
                .map(|i| ids[i].clone())
                .collect()
        })
        .collect())
}

/// Cosine similarity with degenerate (zero) vectors scoring 0 against everything.
fn similarity<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).to_f64_lossy()
}

fn rank_by<T: Scalar>(
    query: &JointEmbedding<T>,
    candidates: &[&JointEmbedding<T>],
) -> Result<usize> {
    let truth = candidates
        .iter()
        .find(|c| c.id == query.id)
        .ok_or_else(|| Error::UnknownRecipe(query.id.clone()))?;
    let s_true = similarity(&query.vector, &truth.vector);
    let ahead = candidates
        .iter()
        .filter(|c| {
            let s = similarity(&query.vector, &c.vector);
            s > s_true || (s == s_true && c.id < truth.id)
        })
        .count();
    Ok(1 + ahead)
}

/// 1-based rank of the candidate sharing the query's id, by descending cosine
/// similarity with ties broken by ascending candidate id.
pub fn rank<T: Scalar>(
    query: &JointEmbedding<T>,
    candidates: &[JointEmbedding<T>],
) -> Result<usize> {
    let refs: Vec<&JointEmbedding<T>> = candidates.iter().collect();
    rank_by(query, &refs)
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranks".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[m] as f64
    } else {
        (sorted[m - 1] + sorted[m]) as f64 / 2.0
    })
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranks".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Ranks of every member of `members` (indices into `set`) against the others.
pub fn subset_ranks<T: Scalar>(
    set: &EmbeddingSet<T>,
    members: &[usize],
    direction: Direction,
) -> Result<Vec<usize>> {
    let (queries, pool) = match direction {
        Direction::ImageToRecipe => (&set.image, &set.text),
        Direction::RecipeToImage => (&set.text, &set.image),
    };
    let candidates: Vec<&JointEmbedding<T>> = members.iter().map(|&i| &pool[i]).collect();
    members
        .iter()
        .map(|&i| rank_by(&queries[i], &candidates))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub k: usize,
    /// Mean over subsets.
    pub mean: f64,
    pub per_subset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub medr_per_subset: Vec<f64>,
    pub medr_mean: f64,
    /// Sample standard deviation of the per-subset MedR (0 for a single subset).
    pub medr_std_dev: f64,
    pub recall: Vec<RecallSummary>,
    pub queries_per_subset: usize,
    pub eval: EvalConfig,
    /// Fully resolved run configuration, filled in by callers that have one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl RetrievalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics over precomputed embeddings; subsets are drawn from `pool_ids`.
pub fn evaluate_embeddings<T: Scalar>(
    set: &EmbeddingSet<T>,
    pool_ids: &[String],
    cfg: &EvalConfig,
) -> Result<RetrievalReport> {
    let subsets = build_subsets(pool_ids, cfg)?;
    let mut medrs = Vec::with_capacity(subsets.len());
    let mut recalls = vec![Vec::with_capacity(subsets.len()); cfg.ks.len()];
    for subset in &subsets {
        let members = subset
            .iter()
            .map(|id| {
                set.position(id)
                    .ok_or_else(|| Error::UnknownRecipe(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let ranks = subset_ranks(set, &members, cfg.direction)?;
        medrs.push(median_rank(&ranks)?);
        for (slot, &k) in recalls.iter_mut().zip(&cfg.ks) {
            slot.push(recall_at_k(&ranks, k)?);
        }
    }
    let (medr_mean, medr_std_dev) = mean_and_std(&medrs);
    Ok(RetrievalReport {
        direction: cfg.direction,
        medr_per_subset: medrs,
        medr_mean,
        medr_std_dev,
        recall: cfg
            .ks
            .iter()
            .zip(recalls)
            .map(|(&k, per_subset)| RecallSummary {
                k,
                mean: per_subset.iter().sum::<f64>() / per_subset.len() as f64,
                per_subset,
            })
            .collect(),
        queries_per_subset: cfg.subset_size,
        eval: cfg.clone(),
        run_config: None,
    })
}

/// Embeds every recipe in `recipes` and evaluates over subsets of them.
pub fn evaluate<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    recipes: &[TokenizedRecipe],
    features: &FeatureStore,
    cfg: &EvalConfig,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    let set = embed_recipes(embedder, recipes, features)?;
    let ids: Vec<String> = recipes.iter().map(|r| r.id.clone()).collect();
    evaluate_embeddings(&set, &ids, cfg)
}

/// First-step ingredient attention of one recipe, restricted to its real tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub recipe_id: String,
    pub tokens: Vec<String>,
    /// One row per attention query, one weight per entry of `tokens`.
    pub weights: Vec<Vec<f64>>,
}

impl AttentionDump {
    /// Header `position token q0 .. q{n-1}`, then one line per token.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("position\ttoken");
        for j in 0..self.weights.len() {
            out.push_str(&format!("\tq{j}"));
        }
        out.push('\n');
        for (i, tok) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{tok}"));
            for row in &self.weights {
                out.push_str(&format!("\t{}", row[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn export_attention<T: Scalar>(
    model: &Model<T>,
    recipe: &TokenizedRecipe,
) -> Result<AttentionDump> {
    let att = model.attention(recipe)?;
    let len = recipe.instruction_tokens.len().min(model.config.shape.p);
    let tokens = recipe.instruction_tokens[..len]
        .iter()
        .map(|&id| token_text(&model.vocab, id))
        .collect();
    let weights = (0..att.weights.rows())
        .map(|j| {
            att.weights.row(j)[..len]
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect()
        })
        .collect();
    Ok(AttentionDump {
        recipe_id: recipe.id.clone(),
        tokens,
        weights,
    })
}

fn token_text(vocab: &Vocabulary, id: usize) -> String {
    vocab.token(id).unwrap_or("<unk>").to_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub modality: Modality,
    pub class_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(w, "id\tmodality\tclass_id").map_err(io)?;
        for j in 0..self.dim {
            write!(w, "\te{j}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for r in &self.rows {
            write!(w, "{}\t{}\t{}", r.id, r.modality.as_str(), r.class_id).map_err(io)?;
            for v in &r.values {
                write!(w, "\t{v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// The `k` most frequent class ids, ties broken by smaller id.
pub fn top_classes(recipes: &[TokenizedRecipe], k: usize) -> Vec<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in recipes {
        *counts.entry(r.class_id).or_default() += 1;
    }
    let mut v: Vec<(usize, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(c, _)| c).collect()
}

/// One text row and one image row per recipe, optionally restricted to `classes`.
pub fn export_embeddings<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    recipes: &[TokenizedRecipe],
    features: &FeatureStore,
    classes: Option<&[usize]>,
) -> Result<EmbeddingTable> {
    let kept: Vec<TokenizedRecipe> = recipes
        .iter()
        .filter(|r| classes.is_none_or(|c| c.contains(&r.class_id)))
        .cloned()
        .collect();
    let set = embed_recipes(embedder, &kept, features)?;
    let mut table = EmbeddingTable {
        dim: set.text.first().map_or(0, |e| e.dim()),
        rows: Vec::with_capacity(2 * kept.len()),
    };
    for i in 0..set.len() {
        for e in [&set.text[i], &set.image[i]] {
            table.rows.push(EmbeddingRow {
                id: e.id.clone(),
                modality: e.modality,
                class_id: set.class_ids[i],
                values: e.vector.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(id: &str, modality: Modality, v: Vec<f64>) -> JointEmbedding<f64> {
        JointEmbedding {
            id: id.into(),
            modality,
            vector: v,
            degenerate: false,
        }
    }

    #[test]
    fn metric_fixtures() {
        assert_eq!(median_rank(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 3, 20], 5).unwrap(), 2.0 / 3.0);
        assert_eq!(median_rank(&[2, 4]).unwrap(), 3.0);
        assert!(median_rank(&[]).is_err());
        assert!(recall_at_k(&[], 1).is_err());
    }

    #[test]
    fn rank_cases() {
        let q = emb("a", Modality::Image, vec![1.0, 0.0, 0.0]);
        let cands = vec![
            emb("b", Modality::Text, vec![0.0, 1.0, 0.0]),
            emb("a", Modality::Text, vec![1.0, 0.0, 0.0]),
        ];
        assert_eq!(rank(&q, &cands).unwrap(), 1);

        let c = vec![
            emb("x", Modality::Text, vec![0.0, 1.0, 0.0]),
            emb("y", Modality::Text, vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0]),
            emb("z", Modality::Text, vec![0.0, 0.0, 1.0]),
        ];
        let qy = emb("y", Modality::Image, vec![1.0, 0.0, 0.0]);
        assert_eq!(rank(&qy, &c).unwrap(), 1);
        let qz = emb("q", Modality::Image, vec![1.0, 0.0, 0.0]);
        assert!(matches!(rank(&qz, &c), Err(Error::UnknownRecipe(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let q = emb("b", Modality::Image, vec![1.0, 0.0]);
        let same = vec![1.0, 0.0];
        let cands = vec![
            emb("c", Modality::Text, same.clone()),
            emb("b", Modality::Text, same.clone()),
            emb("a", Modality::Text, same),
        ];
        assert_eq!(rank(&q, &cands).unwrap(), 2);
    }

    #[test]
    fn subsets_are_distinct_and_deterministic() {
        let ids: Vec<String> = (0..50).map(|i| format!("r{i}")).collect();
        let cfg = EvalConfig {
            subsets: 4,
            subset_size: 20,
            ..EvalConfig::default()
        };
        let s = build_subsets(&ids, &cfg).unwrap();
        assert_eq!(s.len(), 4);
        for sub in &s {
            let mut u = sub.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 20);
        }
        assert_eq!(s, build_subsets(&ids, &cfg).unwrap());

        let full = EvalConfig {
            subsets: 1,
            subset_size: 50,
            ..EvalConfig::default()
        };
        let mut all = build_subsets(&ids, &full).unwrap().remove(0);
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(all, expect);

        let too_big = EvalConfig {
            subset_size: 51,
            ..full
        };
        assert!(build_subsets(&ids, &too_big).is_err());
    }

    proptest! {
        #[test]
        fn rank_ignores_candidate_order(seed in 0u64..1000, n in 2usize..20) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values make ties likely
            let mut cands: Vec<JointEmbedding<f64>> = (0..n)
                .map(|i| emb(&format!("c{i:02}"), Modality::Text,
                             (0..3).map(|_| rng.random_range(-2i32..=2) as f64).collect()))
                .collect();
            cands[0].vector = vec![1.0, 1.0, 1.0];
            let q = emb(&cands[n / 2].id.clone(), Modality::Image, vec![1.0, 0.0, 1.0]);
            let r1 = rank(&q, &cands).unwrap();
            cands.reverse();
            cands.swap(0, n - 1);
            prop_assert_eq!(r1, rank(&q, &cands).unwrap());
        }

        #[test]
        fn recall_monotone(ranks in proptest::collection::vec(1usize..100, 1..50), k1 in 1usize..100, k2 in 1usize..100) {
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            prop_assert!(recall_at_k(&ranks, lo).unwrap() <= recall_at_k(&ranks, hi).unwrap());
        }
    }
}
