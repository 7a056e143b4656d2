//! The full model: parameter store plus handles for every path, and the
//! checkpoint container.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{ImageFeature, TokenizedRecipe, Vocabulary};
use crate::embedding::{JointEmbedding, Modality};
use crate::error::{Error, Result};
use crate::image_head::{feature_row, image_graph, ImageHeadParams};
use crate::objectives::ClassifierParams;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Matrix;
use crate::text_encoder::{
    sinusoidal_table, text_graph, FusedEmbedding, ShapeConfig, TextForward, TextParams,
};

const CHECKPOINT_FORMAT: &str = "recipe-retrieval-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub shape: ShapeConfig,
    /// Image feature dimension `D`.
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub text: TextParams,
    pub image: ImageHeadParams,
    pub classifier: ClassifierParams,
    positional: Matrix<T>,
}

/// Per-recipe attention weights of the first ingredient-attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeAttention<T> {
    /// `n × p`; masked columns are exactly zero.
    pub weights: Matrix<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model; all randomness is drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextParams::init(&mut params, &config.shape, vocab.len(), &mut rng);
        let image =
            ImageHeadParams::init(&mut params, config.feature_dim, config.shape.e, &mut rng);
        let classifier =
            ClassifierParams::init(&mut params, config.shape.e, config.num_classes, &mut rng);
        let positional = sinusoidal_table(config.shape.p, config.shape.w);
        Ok(Self {
            config,
            vocab,
            params,
            text,
            image,
            classifier,
            positional,
        })
    }

    fn from_store(config: ModelConfig, vocab: Vocabulary, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let text = TextParams::lookup(&params, &config.shape)?;
        let image = ImageHeadParams::lookup(&params)?;
        let classifier = ClassifierParams::lookup(&params)?;
        let positional = sinusoidal_table(config.shape.p, config.shape.w);
        let model = Self {
            config,
            vocab,
            params,
            text,
            image,
            classifier,
            positional,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Compares every stored tensor against the shapes a fresh model would have.
    fn check_shapes(&self) -> Result<()> {
        let reference = Model::<f64>::new(self.config.clone(), self.vocab.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                self.params.len()
            )));
        }
        for (_, p) in reference.params.iter() {
            let found = self
                .params
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if found.value.shape() != p.value.shape() || found.group != p.group {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` is {:?}/{:?}, expected {:?}/{:?}",
                    p.name,
                    found.value.shape(),
                    found.group,
                    p.value.shape(),
                    p.group
                )));
            }
        }
        Ok(())
    }

    /// Replaces the word embedding table, e.g. with pretrained vectors.
    pub fn set_word_embeddings(&mut self, table: &Matrix<T>) -> Result<()> {
        let target = self.params.value_mut(self.text.embedding);
        if target.shape() != table.shape() {
            return Err(Error::Shape(format!(
                "embedding table {:?}, model expects {:?}",
                table.shape(),
                target.shape()
            )));
        }
        *target = table.clone();
        Ok(())
    }

    pub fn text_forward(
        &self,
        g: &mut Graph<'_, T>,
        recipe: &TokenizedRecipe,
    ) -> Result<TextForward> {
        text_graph(g, &self.text, &self.config.shape, &self.positional, recipe)
    }

    pub fn image_forward(
        &self,
        g: &mut Graph<'_, T>,
        feature: &ImageFeature,
    ) -> Result<FusedEmbedding> {
        let f: Var = g.input(feature_row(feature));
        image_graph(g, f, &self.image)
    }

    pub fn encode_recipe(&self, recipe: &TokenizedRecipe) -> Result<JointEmbedding<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.text_forward(&mut g, recipe)?;
        Ok(JointEmbedding {
            id: recipe.id.clone(),
            modality: Modality::Text,
            vector: g.value(out.embedding).as_slice().to_vec(),
            degenerate: out.degenerate,
        })
    }

    /// Image embedding, tagged with `id` (normally the paired recipe id).
    pub fn encode_image(&self, id: &str, feature: &ImageFeature) -> Result<JointEmbedding<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.image_forward(&mut g, feature)?;
        Ok(JointEmbedding {
            id: id.to_owned(),
            modality: Modality::Image,
            vector: g.value(out.embedding).as_slice().to_vec(),
            degenerate: out.degenerate,
        })
    }

    pub fn attention(&self, recipe: &TokenizedRecipe) -> Result<RecipeAttention<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.text_forward(&mut g, recipe)?;
        Ok(RecipeAttention {
            weights: g.value(out.attention).clone(),
            mask: out.mask,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            text: self.text.clone(),
            image: self.image.clone(),
            classifier: self.classifier.clone(),
            positional: self.positional.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: T::NAME.into(),
            config: self.config.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            params: self
                .params
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    data: p
                        .value
                        .as_slice()
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &ckpt)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, converting to `T` if it was saved at another precision.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let vocab = Vocabulary::from_tokens(ckpt.vocabulary.iter().skip(2).cloned());
        if vocab.tokens() != ckpt.vocabulary.as_slice() {
            return Err(Error::Checkpoint(
                "vocabulary is not in canonical order".into(),
            ));
        }
        let mut params = ParamStore::new();
        for p in ckpt.params {
            if p.data.len() != p.rows * p.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has {} values for shape {}x{}",
                    p.name,
                    p.data.len(),
                    p.rows,
                    p.cols
                )));
            }
            if params.id(&p.name).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate parameter `{}`",
                    p.name
                )));
            }
            let data = p.data.into_iter().map(T::lit).collect();
            params.insert(p.name, p.group, Matrix::from_vec(p.rows, p.cols, data));
        }
        Self::from_store(ckpt.config, vocab, params)
    }

    /// Reads only the precision tag of a checkpoint.
    pub fn stored_precision(path: &Path) -> Result<Precision> {
        #[derive(Deserialize)]
        struct Header {
            precision: String,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let h: Header = serde_json::from_reader(BufReader::new(file))?;
        h.precision
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unknown precision `{}`", h.precision)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    precision: String,
    config: ModelConfig,
    vocabulary: Vec<String>,
    params: Vec<StoredParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}
